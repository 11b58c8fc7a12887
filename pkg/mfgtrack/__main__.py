import logging
import sys
from argparse import ArgumentParser, Namespace
from pathlib import Path
from typing import List, Optional

from .config import load_config
from .evaluate import evaluate
from .experiment import run_eval, run_experiment
from .plot import plot_curves
from .sequence import load_sequence, read_boxes, save_sequence
from .synth import SyntheticSpec, generate_sequence


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="mfgtrack", description="RGB-T tracking with dynamic fusion filters.")
    parser.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="Log training losses, updates and search switches.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Render a synthetic RGB-T sequence.")
    synth.add_argument("--spec", type=Path, help="JSON scene description. Defaults to an easy scene.")
    synth.add_argument("--seed", type=int, default=0, help="Random seed.")
    synth.add_argument("--out", type=Path, required=True, help="Output sequence directory.")

    track = commands.add_parser("track", help="Track a sequence and write x,y,w,h lines.")
    track.add_argument("--config", type=Path, help="Flat key-value config file.")
    track.add_argument("--seq", type=Path, required=True, help="Sequence directory.")
    track.add_argument("--out", type=Path, required=True, help="Result file.")
    track.add_argument(
        "--box-format",
        choices=("auto", "xywh", "corners"),
        default="auto",
        help="Ground-truth box format of the sequence.",
    )

    ev = commands.add_parser("eval", help="Precision and success of a result file.")
    ev.add_argument("--pred", type=Path, required=True, help="Predicted boxes.")
    ev.add_argument("--gt", type=Path, required=True, help="Ground-truth boxes.")
    ev.add_argument("--pr-threshold", type=float, default=20.0, help="Precision threshold in px.")
    ev.add_argument("--save-figure", type=Path, help="Write precision and success plots here.")

    for name, help_text in (
        ("train-attention", "Train the attention network on synthetic sequences."),
        ("train-tracker", "Multi-domain offline training of the tracking network."),
        ("ablation", "Fusion mode x CBAM x global search table."),
    ):
        command = commands.add_parser(name, help=help_text)
        command.add_argument("--config", type=Path, help="Flat key-value config file.")
        command.add_argument("--out", type=Path, help="Output directory (checkpoint file for train-tracker).")

    sweep = commands.add_parser("sweep", help="Track synthetic sequences for each value of one key.")
    sweep.add_argument("--config", type=Path, help="Flat key-value config file.")
    sweep.add_argument("--param", required=True, help="Dotted config key, e.g. mfgnet.kernel_size.")
    sweep.add_argument("--values", required=True, help="Comma-separated values.")
    sweep.add_argument("--out", type=Path, help="Output directory.")
    return parser


def run(args: Namespace, log: Optional[logging.Logger]):
    if args.command == "synth":
        spec = SyntheticSpec.from_file(args.spec) if args.spec else SyntheticSpec()
        record = generate_sequence(spec, args.seed)
        save_sequence(record, args.out)
        print(f"Wrote {len(record)} frames to {args.out}")
        return
    if args.command == "eval":
        report = run_eval(args.pred, args.gt, args.pr_threshold)
        print(report.table.to_string(float_format="{:.4f}".format))
        if args.save_figure:
            result = evaluate(read_boxes(args.pred), read_boxes(args.gt), args.pr_threshold)
            plot_curves({args.pred.stem: result}, args.save_figure)
        return
    settings = load_config(args.config)
    if args.command == "track":
        record = load_sequence(args.seq, args.box_format, log)
        report = run_experiment(
            settings, "track", [record], log, out_dir=args.out.parent / f"{args.out.stem}_report"
        )
        args.out.parent.mkdir(parents=True, exist_ok=True)
        report.paths[0].replace(args.out)
        print(report.table.to_string(float_format="{:.4f}".format))
        return
    mode = {"train-attention": "attention-train", "train-tracker": "tracker-train"}.get(
        args.command, args.command
    )
    options = {"out": args.out} if mode == "tracker-train" else {"out_dir": args.out}
    if mode == "sweep":
        options.update(param=args.param, values=[v.strip() for v in args.values.split(",")])
    report = run_experiment(settings, mode, log=log, **options)
    print(report.table.to_string(float_format="{:.4f}".format))


def main(argv: Optional[List[str]] = None):
    args = build_parser().parse_args(argv)
    log: Optional[logging.Logger] = None
    if args.verbose:
        logging.basicConfig(level=logging.INFO)
        log = logging.getLogger(f"mfgtrack.{args.command}")
    try:
        run(args, log)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
