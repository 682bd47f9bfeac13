"""Command line entry point: ``berlab train|sweep|mram-report|emit-plots``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import datasets, harness, mram

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


_FLAG_TYPES = {"classes": _ints, "bers": _floats, "binary_fc_input": lambda s: s.lower() in ("1", "true", "yes")}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file of config keys; flags override it")
    for f in dataclasses.fields(harness.ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in _FLAG_TYPES:
            typ = _FLAG_TYPES[f.name]
        elif f.name in ("model", "dataset", "out_dir", "data_root"):
            typ = str
        elif f.name in ("ber", "lr", "lr_decay", "beta1", "beta2", "adam_eps", "width_scale"):
            typ = float
        else:
            typ = int
        p.add_argument(flag, dest=f.name, type=typ, default=None)


def _config_from_args(args) -> harness.ExperimentConfig:
    base = harness.ExperimentConfig.load(args.config).to_dict() if args.config else {}
    for f in dataclasses.fields(harness.ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    return harness.ExperimentConfig.from_dict(base)


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    repeat = args.repeat

    def progress(epoch, loss, acc):
        print(f"epoch {epoch + 1}/{cfg.epochs} loss {loss:.4f} test_acc {acc:.4f}", flush=True)

    rec = harness.run_training(cfg, repeat, progress=progress)
    out = Path(cfg.out_dir)
    harness.atomic_write(harness.record_path(out, cfg.ber, repeat), rec.to_json())
    result = harness.SweepResult({cfg.ber: [rec]})
    harness.emit_sweep_outputs(result, out)
    print(f"final_acc {rec.final_acc:.4f} max_acc {rec.max_acc:.4f} ({rec.wall_time:.1f} s)")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args)

    def progress(ber, r, rec):
        print(f"ber {ber:g} repeat {r} max_acc {rec.max_acc:.4f} final_acc {rec.final_acc:.4f}", flush=True)

    result = harness.run_sweep(cfg, progress=progress)
    for fail in result.failures:
        print(f"run failed: ber {fail.ber:g} repeat {fail.repeat}: {fail.error}", file=sys.stderr)
    if not result.records:
        return EXIT_RUNTIME
    harness.emit_sweep_outputs(result, cfg.out_dir)
    for ber in result.bers:
        print(f"ber {ber:g} top1max {result.top1max(ber):.4f} n {len(result.records[ber])}")
    return EXIT_RUNTIME if result.failures else EXIT_OK


def _cmd_emit_plots(args) -> int:
    cfg = _config_from_args(args)
    result = harness.load_sweep(cfg)
    if not result.records:
        print("no stored records match this config", file=sys.stderr)
        return EXIT_DATA
    harness.emit_sweep_outputs(result, cfg.out_dir)
    for fail in result.failures:
        print(f"missing: ber {fail.ber:g} repeat {fail.repeat}", file=sys.stderr)
    return EXIT_OK


def _cmd_mram(args) -> int:
    try:
        params = mram.MtjParams(delta=args.delta, tau_d=args.tau_d, v_c0=args.v_c0, v_bd=args.v_bd)
        model = None if args.prefactor is None else mram.WerModelParams(args.prefactor, args.slope)
    except ValueError as e:
        raise harness.ConfigError(str(e)) from None
    paths = harness.mram_report(params, model, args.mode, args.out_dir)
    print(Path(paths["report"]).read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="berlab", description="Binary-activation error resilience experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a single run")
    _add_config_flags(p)
    p.add_argument("--repeat", type=int, default=0, help="repeat index (seed = base seed + repeat)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="run a BER grid with repeats (resumable)")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("emit-plots", help="rewrite CSV and plot data from stored records")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_emit_plots)

    p = sub.add_parser("mram-report", help="write the operation-window table and iso-WER curves")
    d = mram.MtjParams()
    p.add_argument("--delta", type=float, default=d.delta)
    p.add_argument("--tau-d", type=float, default=d.tau_d, help="ns")
    p.add_argument("--v-c0", type=float, default=d.v_c0, help="V")
    p.add_argument("--v-bd", type=float, default=d.v_bd, help="V")
    p.add_argument("--prefactor", type=float, default=None, help="WER prefactor; calibrated when omitted")
    p.add_argument("--slope", type=float, default=2.0)
    p.add_argument("--mode", choices=[m.value for m in mram.WindowMode], default="error_resilient")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=_cmd_mram)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except harness.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except datasets.DatasetError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, RuntimeError, ValueError, FloatingPointError) as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
