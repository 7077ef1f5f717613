"""Training/evaluation entry points and artifact emission.

Everything here is deterministic given (seed, config, corpus): metric CSV
bytes match across runs except for the wall-clock column.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import DataConfig, to_data_config, to_model_config, to_optimizer_config
from .data import Vocab, gen_recall, ingest, recall_spec, split_train_valid
from .errors import ContractError
from .model import (ModelConfig, ModelParams, StreamState, bind_params, init_model_params,
                    init_stream_state, named_tensors, run_segment, train_stream)
from .optim import OptimizerConfig
from .tensor import Tape, Tensor

METRICS_HEADER = ["step", "segment", "loss", "ppl", "grad_norm", "ortho_err", "wall_ms"]


def evaluate_ppl(params: ModelParams, cfg: ModelConfig, ids) -> tuple[float, int]:
    """Perplexity over a stream: exp(mean token NLL), memory carried across
    segments without truncation, state reset only at stream start. Returns
    (ppl, tokens scored); the trailing partial segment is not scored."""
    ids = np.asarray(ids, dtype=np.intp).reshape(-1)
    segments = (ids.size - 1) // cfg.n
    if segments < 1:
        raise ContractError(f"evaluation stream must cover at least one segment of {cfg.n} tokens")
    state = init_stream_state(cfg)
    total_nll = 0.0
    for s in range(segments):
        o = s * cfg.n
        run = run_segment(ids[o:o + cfg.n], state, params, cfg)
        state = run.new_state
        total_nll += T.cross_entropy(run.logits, ids[o + 1:o + cfg.n + 1]).item() * cfg.n
    tokens = segments * cfg.n
    return float(np.exp(total_nll / tokens)), tokens


def recall_accuracy(params: ModelParams, cfg: ModelConfig, ids, mask) -> tuple[float, int]:
    """Fraction of scored positions whose argmax prediction is the target."""
    ids = np.asarray(ids, dtype=np.intp).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    segments = (ids.size - 1) // cfg.n
    state = init_stream_state(cfg)
    hits = 0
    total = 0
    for s in range(segments):
        o = s * cfg.n
        run = run_segment(ids[o:o + cfg.n], state, params, cfg)
        state = run.new_state
        scored = np.nonzero(mask[o:o + cfg.n])[0]
        if scored.size:
            preds = run.logits.data[scored].argmax(axis=1)
            hits += int((preds == ids[o + 1 + scored]).sum())
            total += scored.size
    if total == 0:
        raise ContractError("no scored positions in the evaluation stream")
    return hits / total, total


# ---------------------------------------------------------------------------
# whole-model gradient checking


_GROUPS = (
    ("cayley", lambda n: "cayley" in n),
    ("memory_rnn", lambda n: n.startswith("memory_rnn")),
    ("pos_rnn", lambda n: n.startswith("pos_rnn")),
    ("attention", lambda n: ".attn." in n),
    ("ffn", lambda n: any(part in n for part in (".w1", ".b1", ".w2", ".b2"))),
    ("layer_norm", lambda n: ".ln" in n),
    ("embedding", lambda n: n == "embedding"),
    ("head", lambda n: n in ("out_proj", "out_bias")),
)


def _group_of(name: str) -> str:
    for group, match in _GROUPS:
        if match(name):
            return group
    return "other"


def model_gradcheck(cfg: ModelConfig, seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Tape gradients of a two-segment windowed loss vs central differences,
    for every coordinate of every trainable array; returns the max relative
    error per parameter group."""
    rng = np.random.default_rng(seed)
    params = init_model_params(cfg, rng=np.random.default_rng([seed, 1]))
    seg1 = rng.integers(0, cfg.vocab, size=cfg.n)
    seg2 = rng.integers(0, cfg.vocab, size=cfg.n)
    targets1 = rng.integers(0, cfg.vocab, size=cfg.n)
    targets2 = rng.integers(0, cfg.vocab, size=cfg.n)

    def window_loss(live: ModelParams, tape: Optional[Tape]):
        state = StreamState(m=Tensor(np.zeros((1, cfg.d_m))),
                            pos_h=Tensor(np.zeros((1, cfg.d_m))), tape=tape)
        r1 = run_segment(seg1, state, live, cfg)
        r2 = run_segment(seg2, r1.new_state, live, cfg)
        return T.add(T.scale(T.cross_entropy(r1.logits, targets1), 0.5),
                     T.scale(T.cross_entropy(r2.logits, targets2), 0.5))

    tape = Tape()
    bound = bind_params(params, tape)
    tape.backward(window_loss(bound, tape))
    analytic = {name: tape.grad(leaf) for (name, _), (_, leaf)
                in zip(named_tensors(params), named_tensors(bound))}

    errors: dict[str, float] = {}
    for name, tensor in named_tensors(params):
        arr = tensor.data
        a = analytic[name]
        worst = 0.0
        for i in range(arr.size):
            orig = arr.flat[i]
            arr.flat[i] = orig + step
            hi = window_loss(params, None).item()
            arr.flat[i] = orig - step
            lo = window_loss(params, None).item()
            arr.flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            denom = max(abs(a.flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a.flat[i] - numeric) / denom)
        group = _group_of(name)
        errors[group] = max(errors.get(group, 0.0), worst)
    return errors


# ---------------------------------------------------------------------------
# full training runs


@dataclass
class RunResult:
    run_id: str
    params: ModelParams
    cfg: ModelConfig
    vocab: Optional[Vocab]
    records: list
    metrics_path: Optional[Path]
    checkpoint_path: Optional[Path]
    valid_ids: Optional[np.ndarray]


def prepare_task(raw_cfg: dict):
    """Resolve the data source: (model cfg, train ids, target mask, vocab, valid ids)."""
    dc: DataConfig = to_data_config(raw_cfg)
    mc = to_model_config(raw_cfg)
    if dc.task == "text":
        if not dc.corpus:
            raise ContractError("task 'text' needs a corpus path")
        vocab, ids = ingest(dc.corpus, dc.tokenizer)
        train_ids, valid_ids = split_train_valid(ids)
        if mc.vocab == 0:
            mc.vocab = vocab.size
        elif mc.vocab < vocab.size:
            raise ContractError(f"configured vocab {mc.vocab} smaller than corpus vocab {vocab.size}")
        return mc, train_ids, None, vocab, valid_ids
    spec = recall_spec(dc.recall_k, mc.n, dc.recall_gap)
    ids, mask = gen_recall(spec, dc.recall_episodes, seed=mc.seed)
    if mc.vocab == 0:
        mc.vocab = spec.vocab_size
    elif mc.vocab < spec.vocab_size:
        raise ContractError(f"configured vocab {mc.vocab} too small for the recall task")
    return mc, ids, mask, None, None


def train_run(raw_cfg: dict, out_dir, progress=None) -> RunResult:
    """Train per the config; writes the metrics CSV incrementally and a final
    checkpoint, both run-id prefixed so concurrent runs can share a directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mc, train_ids, mask, vocab, valid_ids = prepare_task(raw_cfg)
    oc: OptimizerConfig = to_optimizer_config(raw_cfg)
    run_id = raw_cfg.get("run_id") or f"{raw_cfg['task']}-{mc.cell_kind}-s{mc.seed}"
    metrics_path = out_dir / f"{run_id}-metrics.csv"
    ckpt_path = out_dir / f"{run_id}-ckpt.bin"

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)

        def on_step(rec, live_params):
            writer.writerow([rec.step, rec.segment, repr(rec.loss), repr(rec.ppl),
                             repr(rec.grad_norm), repr(rec.ortho_err), f"{rec.wall_ms:.3f}"])
            return progress(rec, live_params) if progress else False

        params, records = train_stream(train_ids, mc, oc, target_mask=mask, progress=on_step)

    save_checkpoint(ckpt_path, mc, params, vocab)
    return RunResult(run_id=run_id, params=params, cfg=mc, vocab=vocab, records=records,
                     metrics_path=metrics_path, checkpoint_path=ckpt_path, valid_ids=valid_ids)


def eval_json(ppl: float, tokens: int, seg_len: int) -> str:
    return json.dumps({"ppl": ppl, "tokens": tokens, "seg_len": seg_len}, indent=2)
