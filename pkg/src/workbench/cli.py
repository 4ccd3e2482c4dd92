"""``workbench`` command line: run, grid, verify, prepare-mnist.

Exit codes: 0 success, 1 invalid input (bad experiment file, bad axes,
failed acceptance criterion), 2 runtime failure.
"""

import argparse
import logging
import sys
import traceback
from pathlib import Path

from .experiment import ExperimentError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _read(path):
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ExperimentError([f"cannot read {path}: {exc}"]) from None


def _default_out(path, suffix=""):
    return Path("workbench-out") / (Path(path).stem + suffix)


def cmd_run(args):
    from .runner import run_experiment, with_overrides

    text = _read(args.experiment)
    overrides = {}
    if args.seed is not None:
        overrides = {("engine", "seed"): args.seed, ("noise", "seed"): args.seed}
    exp = with_overrides(text, overrides)
    out = Path(args.out) if args.out else _default_out(args.experiment)
    report = run_experiment(exp, out)
    print(f"final_acc={report.final_acc:.4f} best_acc={report.best_acc:.4f} -> {out / 'report.csv'}")
    return EXIT_OK


def _list(text, conv, what):
    try:
        items = [conv(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ExperimentError([f"--{what}: cannot parse {text!r}"]) from None
    if not items:
        raise ExperimentError([f"--{what} is empty"])
    return items


def cmd_grid(args):
    from .runner import parse_seeds, run_grid

    text = _read(args.experiment)
    presets = _list(args.presets, str.strip, "presets")
    ratios = _list(args.ratios, float, "ratios")
    try:
        seeds = parse_seeds(args.seeds)
    except ValueError as exc:
        raise ExperimentError([f"--seeds: {exc}"]) from None
    if not seeds:
        raise ExperimentError(["--seeds is empty"])
    if args.parallel < 1:
        raise ExperimentError(["--parallel must be >= 1"])
    out = Path(args.out) if args.out else _default_out(args.experiment, "-grid")
    results = run_grid(text, presets, ratios, seeds, out, parallel=args.parallel)
    failed = [r for r in results if r.status != "ok"]
    for r in results:
        print(f"{r.cell.run_id}: {r.status} final_acc={r.final_acc:.4f}")
    print(f"{len(results) - len(failed)}/{len(results)} cells ok -> {out / 'summary.csv'}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_verify(args):
    from .acceptance import run_check, selected_keys

    try:
        keys = selected_keys(args.only.split(",") if args.only else None, args.skip_slow)
    except KeyError as exc:
        raise ExperimentError([str(exc.args[0])]) from None
    failed = 0
    for key in keys:
        outcome = run_check(key)
        print(outcome.line(), flush=True)
        failed += not outcome.passed
    print(f"{len(keys) - failed}/{len(keys)} criteria passed")
    return EXIT_INVALID if failed else EXIT_OK


def cmd_prepare_mnist(args):
    from .mnist import DEFAULT_CACHE, prepare_mnist

    out = prepare_mnist(Path(args.out) if args.out else DEFAULT_CACHE, npm_source=args.npm,
                        test_fraction=args.test_fraction, seed=args.seed)
    print(f"wrote MNIST IDX files to {out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="workbench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one experiment and write report.csv")
    r.add_argument("experiment")
    r.add_argument("--seed", type=int, help="sets both the training and the noise seed")
    r.add_argument("--out", help="output directory (default workbench-out/<file stem>)")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("grid", help="preset x ratio x seed grid with summary.csv")
    g.add_argument("experiment")
    g.add_argument("--presets", required=True, help="comma-separated preset names")
    g.add_argument("--ratios", required=True, help="comma-separated noise ratios")
    g.add_argument("--seeds", default="0", help="inclusive range like 0..4, or a comma list")
    g.add_argument("--parallel", type=int, default=1, help="worker processes")
    g.add_argument("--out", help="output directory (default workbench-out/<file stem>-grid)")
    g.set_defaults(func=cmd_grid)

    v = sub.add_parser("verify", help="run the acceptance suite")
    v.add_argument("--only", help="comma-separated criterion ids, e.g. 1,2,7b")
    v.add_argument("--skip-slow", action="store_true", help="skip the MNIST/two-moons training sweeps")
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("prepare-mnist", help="build MNIST IDX files from a bundled source")
    m.add_argument("--npm", help="path to the npm `mnist` package tarball or directory")
    m.add_argument("--out", help="destination directory (default ~/.cache/workbench/mnist)")
    m.add_argument("--test-fraction", type=float, default=0.2)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_prepare_mnist)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ExperimentError as exc:
        print(f"error: invalid input\n{exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
