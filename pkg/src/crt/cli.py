"""Command-line entry points.

Exit codes: 0 success, 1 verification failure (a numeric check did not
hold), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .analysis import sweep, verify_bound
from .checkpoint import load_checkpoint
from .config import apply_overrides, default_config, load_config, to_model_config
from .data import ingest
from .errors import ConfigError, ContractError
from .harness import eval_json, evaluate_ppl, model_gradcheck, train_run

GRADCHECK_THRESHOLD = 1e-4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train a model; writes run-id prefixed metrics CSV and checkpoint"),
        ("eval", "perplexity of a checkpoint on a corpus; writes JSON"),
        ("flops", "closed-form FLOP/parameter sweep; writes CSV"),
        ("verify-bound", "measure the cross-segment gradient bound; writes JSON"),
        ("gradcheck", "finite-difference check of every parameter group"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", type=Path, default=None, help="config file path")
        cmd.add_argument("--set", dest="overrides", action="append", default=[],
                         metavar="KEY=VALUE", help="override a config key (repeatable)")
        cmd.add_argument("--seed", type=int, default=None, help="override the seed key")
        cmd.add_argument("--out", type=Path, default=Path("."), help="artifact directory")
    return parser


def _resolve_config(args) -> dict:
    cfg = load_config(args.config) if args.config else default_config()
    apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _cmd_train(cfg: dict, out: Path) -> int:
    result = train_run(cfg, out)
    last = result.records[-1] if result.records else None
    print(f"run {result.run_id}: {len(result.records)} steps"
          + (f", final loss {last.loss:.4f} (ppl {last.ppl:.2f})" if last else ""))
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(cfg: dict, out: Path) -> int:
    if not cfg["checkpoint"]:
        raise ConfigError("eval needs checkpoint=PATH (via config or --set)")
    if not cfg["corpus"]:
        raise ConfigError("eval needs corpus=PATH (via config or --set)")
    model_cfg, params, vocab = load_checkpoint(cfg["checkpoint"])
    if vocab is not None:
        _, ids = ingest(cfg["corpus"], vocab.mode)
    else:
        _, ids = ingest(cfg["corpus"], cfg["tokenizer"])
    ppl, tokens = evaluate_ppl(params, model_cfg, ids)
    payload = eval_json(ppl, tokens, model_cfg.n)
    out.mkdir(parents=True, exist_ok=True)
    run_id = cfg.get("run_id") or f"eval-s{model_cfg.seed}"
    path = out / f"{run_id}-ppl.json"
    path.write_text(payload + "\n", encoding="utf-8")
    print(payload)
    print(f"wrote {path}", file=sys.stderr)
    return 0


def _parse_grid(raw: str):
    grid = []
    for part in raw.split(";"):
        part = part.strip()
        if not part:
            continue
        pieces = part.split(",")
        if len(pieces) != 3:
            raise ConfigError(f"grid point {part!r} must be L,n,d_m")
        grid.append(tuple(int(x) for x in pieces))
    if not grid:
        raise ConfigError("flops grid is empty")
    return grid


def _cmd_flops(cfg: dict, out: Path) -> int:
    kinds = [k.strip() for k in cfg["flops_kinds"].split(",") if k.strip()]
    grid = _parse_grid(cfg["flops_grid"])
    out.mkdir(parents=True, exist_ok=True)
    run_id = cfg.get("run_id") or "flops"
    path = out / f"{run_id}-sweep.csv"
    with open(path, "w", newline="") as fh:
        sweep(kinds, grid, out=fh)
    print(path.read_text(), end="")
    print(f"wrote {path}", file=sys.stderr)
    return 0


def _cmd_verify_bound(cfg: dict, out: Path) -> int:
    model_cfg = to_model_config(cfg)
    if model_cfg.vocab == 0:
        model_cfg.vocab = 9
    reports = []
    violations = 0
    for seed in range(cfg["bound_seeds"]):
        for i in range(model_cfg.n):
            for k in range(model_cfg.n):
                rep = verify_bound(model_cfg, seed, 0, i, 1, k)
                reports.append(rep)
                violations += 0 if rep.ok else 1
    out.mkdir(parents=True, exist_ok=True)
    run_id = cfg.get("run_id") or "bound"
    path = out / f"{run_id}-report.json"
    summary = {
        "checked": len(reports),
        "violations": violations,
        "seeds": cfg["bound_seeds"],
        "seg_len": model_cfg.n,
        "d_m": model_cfg.d_m,
        "reports": [json.loads(r.to_json()) for r in reports],
    }
    path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"checked {len(reports)} (seed, i, k) cases: {violations} violations")
    print(f"wrote {path}", file=sys.stderr)
    return 0 if violations == 0 else 1


def _cmd_gradcheck(cfg: dict, out: Path) -> int:
    model_cfg = to_model_config(cfg)
    if model_cfg.vocab == 0:
        model_cfg.vocab = 11
    errors = model_gradcheck(model_cfg, seed=model_cfg.seed)
    worst = max(errors.values())
    for group in sorted(errors):
        flag = "ok" if errors[group] < GRADCHECK_THRESHOLD else "FAIL"
        print(f"{group:12s} max rel err {errors[group]:.3e}  {flag}")
    print(f"overall max {worst:.3e} ({'ok' if worst < GRADCHECK_THRESHOLD else 'FAIL'})")
    return 0 if worst < GRADCHECK_THRESHOLD else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "train":
            return _cmd_train(cfg, args.out)
        if args.command == "eval":
            return _cmd_eval(cfg, args.out)
        if args.command == "flops":
            return _cmd_flops(cfg, args.out)
        if args.command == "verify-bound":
            return _cmd_verify_bound(cfg, args.out)
        if args.command == "gradcheck":
            return _cmd_gradcheck(cfg, args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
