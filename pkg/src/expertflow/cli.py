"""``expertflow`` command line: train, eval, inspect-routing, gradcheck.

Every output path is relative to ``--out``. Exit codes: 0 success, 1
gradient check failure, 2 invalid config or checkpoint, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Optional


from .config import RunConfig, load_config
from .exceptions import CheckpointError, ConfigError, NonFiniteLossError
from .lifecycle import export_activation_csv
from .metrics import KIND_METRICS, EvalReport, evaluate
from .model import (
    DecoderState,
    OracleModel,
    Predictor,
    StepLog,
    load_checkpoint,
    measure_routing,
    run_stage,
    save_checkpoint,
)
from .synthdata import gen_split

log = logging.getLogger("expertflow")

LOSS_HEADER = ["step", "stage", "ce", "z", "aux", "total", "active_experts_mean"]
EVENT_HEADER = "step,stage,layer,action,expert"


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class PipelineResult:
    state: DecoderState
    logs: list = field(default_factory=list)
    events: list = field(default_factory=list)  # (step, stage, layer, action, expert)

    def ce_curve(self, stage: Optional[int] = None) -> list:
        return [l.ce for l in self.logs if stage is None or l.stage == stage]


def splits(cfg: RunConfig):
    train = gen_split(cfg.data, cfg.train.n_train, 0)
    val = gen_split(cfg.data, cfg.train.n_val, cfg.train.n_train)
    return train, val


def loss_csv(logs, blocks: int) -> str:
    lines = [",".join(LOSS_HEADER + [f"K_layer{i}" for i in range(blocks)])]
    for l in logs:
        row = [str(l.step), str(l.stage), _fmt(l.ce), _fmt(l.z), _fmt(l.aux), _fmt(l.total), _fmt(l.active_experts_mean)]
        lines.append(",".join(row + [str(k) for k in l.K]))
    return "\n".join(lines) + "\n"


def events_csv(events) -> str:
    return EVENT_HEADER + "\n" + "".join(f"{s},{st},{layer},{a},{e}\n" for s, st, layer, a, e in events)


def train_pipeline(
    cfg: RunConfig,
    out: Optional[str] = None,
    dataset=None,
    on_step: Optional[Callable[[StepLog], None]] = None,
) -> PipelineResult:
    """Run stages 1 -> 2 -> 3 and (optionally) write all artifacts under ``out``."""
    if dataset is None:
        dataset, _ = splits(cfg)
    state = DecoderState.init(cfg.model, ema_decay=cfg.lifecycle.ema_decay)
    result = PipelineResult(state)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_json())

    def hook(entry: StepLog):
        result.logs.append(entry)
        for layer, action, expert in entry.events:
            result.events.append((entry.step, entry.stage, layer, action, expert))
            log.info("step %d: %s expert %d in layer %d", entry.step, action, expert, layer)
        if on_step is not None:
            on_step(entry)

    offset = 0
    for stage, steps in ((1, cfg.steps.s1), (2, cfg.steps.s2), (3, cfg.steps.s3)):
        try:
            run_stage(
                stage, dataset, state, steps, cfg.lifecycle, cfg.losses,
                batch_size=cfg.train.batch_size, lr=cfg.train.lr, on_step=hook, step_offset=offset,
            )
        except NonFiniteLossError:
            if out is not None:
                _write_outputs(out, result, cfg)
            raise
        offset += steps
        if out is not None and cfg.train.checkpoint_every_stage:
            save_checkpoint(state, os.path.join(out, f"stage{stage}.ckpt"))
    if out is not None:
        _write_outputs(out, result, cfg)
    return result


def _write_outputs(out: str, result: PipelineResult, cfg: RunConfig) -> None:
    with open(os.path.join(out, "loss.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(loss_csv(result.logs, cfg.model.blocks))
    with open(os.path.join(out, "lifecycle.log"), "w", encoding="utf-8", newline="") as fh:
        fh.write(events_csv(result.events))
    with open(os.path.join(out, "routing.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(export_activation_csv([blk.record for blk in result.state.moe]))


def summary_table(report: EvalReport) -> str:
    lines = [f"{'kind':<5} {'n':>5}  metrics"]
    for kind in sorted(report.per_kind):
        vals = "  ".join(f"{m}={report.per_kind[kind][m]:.4f}" for m in KIND_METRICS[kind])
        lines.append(f"{kind:<5} {report.counts[kind]:>5}  {vals}")
    if report.mean_active_experts is not None:
        lines.append(f"mean active experts per token: {report.mean_active_experts:.4f}")
    return "\n".join(lines)


# --- commands -------------------------------------------------------------------


def _run_config(args, overrides) -> RunConfig:
    path = args.config
    if path is None and getattr(args, "out", None):
        saved = os.path.join(args.out, "config.json")
        if os.path.exists(saved) and args.command != "train":
            path = saved
    return load_config(path, overrides)


def _split(cfg: RunConfig, name: str):
    train, val = splits(cfg)
    if name == "train":
        return train
    if name == "val":
        return val
    raise ConfigError(f"unknown split {name!r}; expected 'train' or 'val'")


def cmd_train(args, overrides) -> int:
    cfg = _run_config(args, overrides)
    try:
        result = train_pipeline(cfg, args.out)
    except NonFiniteLossError as exc:
        path = os.path.join(args.out, "diagnostics.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"message": str(exc), "parts": exc.parts}, fh, sort_keys=True, indent=2)
        print(f"error: {exc}\ndiagnostics written to {path}", file=sys.stderr)
        return 3
    last = result.logs[-1] if result.logs else None
    if last is not None:
        print(f"final step {last.step} stage {last.stage}: ce={last.ce:.4f} total={last.total:.4f} K={list(last.K)}")
    return 0


def _checkpoint_path(args) -> str:
    path = args.checkpoint
    if not os.path.isabs(path):
        path = os.path.join(args.out, path)
    return path


def cmd_eval(args, overrides) -> int:
    cfg = _run_config(args, overrides)
    data = _split(cfg, args.split)
    if args.oracle:
        model = OracleModel()
    else:
        model = Predictor(load_checkpoint(_checkpoint_path(args)))
    report = evaluate(model, data)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, f"report_{args.split}")
    with open(stem + ".json", "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_json())
    with open(stem + ".csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv())
    print(summary_table(report))
    return 0


def cmd_inspect_routing(args, overrides) -> int:
    cfg = _run_config(args, overrides)
    data = _split(cfg, args.split)
    state = load_checkpoint(_checkpoint_path(args))
    records = measure_routing(state, data, batch_size=cfg.train.batch_size)
    text = export_activation_csv(records)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"routing_{args.split}.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args, overrides) -> int:
    from .gradcheck import MIN_MARGIN, TOLERANCE, run_gradcheck

    report = run_gradcheck(seed=args.seed)
    for name in sorted(report.errors):
        print(f"{name:<32} {report.errors[name]:.3e}")
    print(f"min |gate pre-activation| = {report.min_margin:.4f}")
    print(f"max relative error = {report.max_error:.3e} ({report.worst}) in {report.seconds:.1f}s")
    if report.min_margin <= MIN_MARGIN:
        print(f"FAIL: gate pre-activations within {MIN_MARGIN} of zero", file=sys.stderr)
        return 1
    if report.max_error >= TOLERANCE:
        print(f"FAIL: {report.worst} relative error {report.max_error:.3e} >= {TOLERANCE}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-routing": cmd_inspect_routing,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="expertflow",
        description="Train and evaluate the dynamic-MoE temporal grounding decoder.",
        epilog="Config overrides: --section.key=value (e.g. --model.gating=topk --model.k=2) and --seed=N.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "inspect-routing"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run config (default: built-in defaults)")
        sp.add_argument("--out", default="runs/default", help="output directory")
        if name != "train":
            sp.add_argument("--checkpoint", default="stage3.ckpt", help="checkpoint path, relative to --out")
            sp.add_argument("--split", default="val", choices=("train", "val"))
        if name == "eval":
            sp.add_argument("--oracle", action="store_true", help="replay gold sequences instead of a checkpoint")
    sp = sub.add_parser("gradcheck")
    sp.add_argument("--seed", type=int, default=0)
    return p


def _is_override(key: str) -> bool:
    return "." in key or key == "--seed"


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    overrides = [r for r in rest if r.startswith("--") and _is_override(r.split("=", 1)[0])]
    unknown = [r for r in rest if r not in overrides]
    if unknown:
        parser.error(f"unrecognized arguments: {' '.join(unknown)}")
    if args.command == "gradcheck" and overrides:
        parser.error("gradcheck takes no config overrides")
    try:
        return COMMANDS[args.command](args, overrides)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
