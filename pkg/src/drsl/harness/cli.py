"""Command line entry point.

    drsl run      --config cfg.yaml     # train + attack + analyze
    drsl train    --config cfg.yaml
    drsl attack   --config cfg.yaml     # needs checkpoints from `train`
    drsl analyze  --config cfg.yaml     # needs `train` (+ `attack` for second-argmax counts)
    drsl compare  --config cfg.yaml --a ce --b drsl-euclidean-tau0.5
    drsl plot     --config cfg.yaml

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

import argparse
import csv
import io
import logging
import sys

from ..container import atomic_write_bytes
from ..errors import ConfigError
from .config import ExperimentConfig
from .experiment import Experiment, compare_runs, load_report, run_experiment
from .plots import emit_plots

log = logging.getLogger("drsl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _common(p):
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--output", help="output directory (overrides output.dir)")
    p.add_argument("--seed-override", help="comma-separated seeds replacing the configured list")
    p.add_argument("--full-data", action="store_true", help="use the full train/test splits")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="drsl", description="Train, attack and analyse loss arms from a YAML config.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("run", "train, attack and analyze in one go"),
                       ("train", "train every loss arm on every seed"),
                       ("attack", "run the attack grid against saved checkpoints"),
                       ("analyze", "softmax-spread, correlation, PCA and matched-accuracy analyses"),
                       ("plot", "render SVG charts from an output directory")]:
        _common(sub.add_parser(name, help=text))
    cmp_ = sub.add_parser("compare", help="per-epsilon robust-accuracy differences between two arms")
    _common(cmp_)
    cmp_.add_argument("--a", default="ce", help="first arm label (default: ce)")
    cmp_.add_argument("--b", help="second arm label (default: every other arm)")
    cmp_.add_argument("--other", help="output directory holding report b (default: same as a)")
    return parser


def load_config(args):
    overrides = {}
    if args.output:
        overrides["output.dir"] = args.output
    if args.seed_override:
        try:
            overrides["seeds"] = [int(s) for s in args.seed_override.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"--seed-override must be comma-separated integers: {exc}") from exc
    if args.full_data:
        overrides["data.subset_size"] = None
        overrides["data.test_subset_size"] = None
    return ExperimentConfig.load(args.config, overrides,
                                 check_files=args.command in ("run", "train", "attack", "analyze"))


def _compare(config, args):
    report_a = load_report(config.output_dir)
    report_b = load_report(args.other) if args.other else report_a
    others = [args.b] if args.b else [a.split("-", 1)[1] for a in report_b.arms() if a.split("-", 1)[1] != args.a]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm_a", "arm_b", "epsilon", "mean_a", "mean_b", "diff", "seeds_a_better", "seeds_b_better", "seeds_tied"])
    for b in others:
        for row in compare_runs(report_a, report_b, args.a, b):
            w.writerow([args.a, b, repr(row["epsilon"]), repr(row["mean_a"]), repr(row["mean_b"]), repr(row["diff"]),
                        row["seeds_a_better"], row["seeds_b_better"], row["seeds_tied"]])
    text = buf.getvalue()
    atomic_write_bytes(f"{config.output_dir}/comparison.csv", text.encode())
    sys.stdout.write(text)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        exp = Experiment(config)
        if args.command == "run":
            run_experiment(config)
            emit_plots(load_report(config.output_dir), config.output_dir)
        elif args.command == "train":
            exp.train()
        elif args.command == "attack":
            exp.attack()
        elif args.command == "analyze":
            exp.analyze()
        elif args.command == "compare":
            _compare(config, args)
        elif args.command == "plot":
            written = emit_plots(load_report(config.output_dir), config.output_dir)
            for path in written:
                print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
